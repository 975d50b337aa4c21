import numpy as np
from Cython.Build import cythonize
from setuptools import setup
from setuptools.extension import Extension

extensions = [
    Extension(
        "densesim.kernels._fast",
        ["src/densesim/kernels/_fast.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
