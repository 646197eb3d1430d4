# Pin BLAS/OpenMP threads before numpy is imported anywhere, so test runs
# are bit-reproducible (same contract as the CLI's IDEVC_THREADS handling).
import os

os.environ.setdefault("IDEVC_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, os.environ["IDEVC_THREADS"])
