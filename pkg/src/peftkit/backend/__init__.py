"""Kernel backend selection.

Two interchangeable backends implement the same kernel contract over
flat float64 buffers:

* ``_ckernels`` -- Cython extension, built by ``setup.py`` when a C
  toolchain is present (compiled without FP contraction so results are
  bit-identical to the pure backend);
* ``py_kernels`` -- pure-Python reference implementation.

Selection happens once at import. The compiled backend is preferred;
set ``PEFTKIT_BACKEND=pure`` or ``PEFTKIT_BACKEND=compiled`` to force a
choice (forcing ``compiled`` raises if the extension is missing).
"""

import os

_choice = os.environ.get("PEFTKIT_BACKEND", "auto").lower()

if _choice in ("auto", "compiled"):
    try:
        from peftkit.backend import _ckernels as kernels
    except ImportError:
        if _choice == "compiled":
            raise ImportError(
                "PEFTKIT_BACKEND=compiled but the compiled kernel core is "
                "not built; run `python setup.py build_ext --inplace` or "
                "reinstall with a C toolchain available"
            )
        from peftkit.backend import py_kernels as kernels
elif _choice in ("pure", "python", "pure-python"):
    from peftkit.backend import py_kernels as kernels
else:
    raise ValueError(
        f"unknown PEFTKIT_BACKEND={_choice!r}; use 'auto', 'compiled', or 'pure'"
    )

BACKEND_NAME = kernels.NAME
