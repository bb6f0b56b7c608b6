"""
tffquant release version, plus the versions of the on-disk formats and of
the frame construction that the formats refer to.
"""
VERSION = "0.3.0"
FORMAT_VERSION = 1
CONSTRUCTION_VERSION = 1
PRNG_NAME = "numpy.PCG64"
