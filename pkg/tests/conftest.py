import os
import sys

# Tiny GEMMs dominate this package; multithreaded BLAS spin-waits cost
# more than they save, and single-threaded kernels are bit-reproducible.
# Must run before numpy is first imported.
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

sys.path.insert(0, os.path.dirname(__file__))
