"""Build the optional compiled device kernel.

The package works without the extension: zstoresim.flashsim falls back to
the pure-Python kernel at import time if the compiled module is missing.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "zstoresim.flashsim._ckernel",
                sources=["src/zstoresim/flashsim/_ckernel.pyx"],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except Exception:
    ext_modules = []

setup(ext_modules=ext_modules)
