"""Build script for the optional compiled rasterizer kernels.

The package works without the extension (a pure-numpy fallback is selected
at import time), so any compiler failure downgrades to a warning instead of
aborting the install.
"""

import sys
import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Try to build the Cython kernels; fall back to pure Python on failure."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, cythonize failure, ...
            warnings.warn(
                f"could not build moesplat._kernels ({exc}); "
                "falling back to the pure-Python rasterizer backend"
            )

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(
                f"could not build {ext.name} ({exc}); "
                "falling back to the pure-Python rasterizer backend"
            )


def make_extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError as exc:
        warnings.warn(f"Cython/numpy unavailable at build time ({exc}); skipping kernels")
        return []
    ext = Extension(
        "moesplat.rasterizer._kernels",
        sources=["src/moesplat/rasterizer/_kernels.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"] if not sys.platform.startswith("win") else ["/O2"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(
    ext_modules=make_extensions(),
    cmdclass={"build_ext": OptionalBuildExt},
)
