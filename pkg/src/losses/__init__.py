# This file marks the losses directory as a package.
