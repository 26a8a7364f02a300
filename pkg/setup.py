"""Builds the optional compiled fit kernel.

If Cython or a C compiler is missing the package still installs and the
numpy kernel is used instead.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("MYOT2_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "myot2.relaxometry._cfit",
                    ["src/myot2/relaxometry/_cfit.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
