# This file marks the engine directory as a package.
