# This file marks the model directory as a package.
