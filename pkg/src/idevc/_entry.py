"""Console entry point.

Pins BLAS/OpenMP thread counts from ``IDEVC_THREADS`` (default 1, for
bit-reproducible runs) before numpy gets imported anywhere in the package.
"""

import os


def _pin_threads() -> None:
    threads = os.environ.setdefault("IDEVC_THREADS", "1")
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(var, threads)


def main() -> None:
    _pin_threads()
    from idevc.cli import cli

    cli(prog_name="idevc")
