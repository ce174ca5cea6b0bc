# This file marks the mesh directory as a package.
