"""Build script: compiles the optional Cython convolution core.

The package works without the extension (a numpy fallback is selected at
import time), so a missing compiler or Cython must not break installation.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """build_ext that degrades to the pure-python fallback on failure."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            print(f"WARNING: could not build the convolution extension ({exc}); "
                  "falling back to the numpy kernels")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"WARNING: skipping {ext.name}: {exc}")


def extensions():
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    exts = [
        Extension(
            "eddyseg.kernels._convcore",
            ["src/eddyseg/kernels/_convcore.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=["-O3"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
    ]
    return cythonize(exts, language_level=3)


setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
