# This file marks the utils directory as a package.
