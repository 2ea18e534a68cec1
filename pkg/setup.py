"""Build the optional Cython kernel.

The package imports and runs without the compiled extension; ``asipdyn.kernels``
falls back to the numpy implementation when ``asipdyn._kernels`` is missing.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("ASIPDYN_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "asipdyn._kernels",
                    ["src/asipdyn/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
