"""Build the optional compiled Monte-Carlo kernel.

The package works without it: ``lcm4rec.mc`` falls back to a vectorised numpy
implementation when ``lcm4rec._mc_kernel`` cannot be imported.
"""
import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("LCM4REC_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "lcm4rec._mc_kernel",
                    ["src/lcm4rec/_mc_kernel.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
