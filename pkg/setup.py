"""Build script: compiles the optional fused-kernel extension.

The extension is a pure speedup; if Cython or a C compiler is missing the
install falls back to the numpy kernels (set MMSBR_NO_EXT=1 to skip the
build entirely).
"""

import os
import warnings

from setuptools import setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Never fail the install over the speedup extension."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            warnings.warn(f"skipping mmsbr._speedups build: {exc}")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"skipping {ext.name}: {exc}")


def extensions():
    if os.environ.get("MMSBR_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError as exc:
        warnings.warn(f"speedup extension not built: {exc}")
        return []
    from setuptools import Extension

    ext = Extension(
        "mmsbr.diffcore._speedups",
        sources=["src/mmsbr/diffcore/_speedups.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], language_level="3")


setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
