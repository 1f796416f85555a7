"""Build script: compiles the optional Cython attention kernels.

The package works without the extension (a NumPy fallback is selected at
import time), so a failed compile only disables the fast backend.
"""

import os

import numpy
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

PYX = "src/recgrela/kernels/_ckernels.pyx"


class OptionalBuildExt(build_ext):
    """Build the extension if possible; warn and continue otherwise."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, cythonize failure, ...
            print(f"warning: skipping compiled kernels ({exc}); "
                  f"falling back to NumPy backend")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: could not build {ext.name} ({exc}); "
                  f"falling back to NumPy backend")


extensions = [
    Extension(
        "recgrela.kernels._ckernels",
        sources=[PYX],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

ext_modules = []
if os.path.exists(PYX):
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(extensions, language_level="3")
    except ImportError:
        pass

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
