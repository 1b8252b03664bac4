import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "riskhorizon._kernels._core",
        ["src/riskhorizon/_kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

# Pure-Python install: RISKHORIZON_NO_EXT=1 pip install .
if os.environ.get("RISKHORIZON_NO_EXT") == "1":
    extensions = []

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
