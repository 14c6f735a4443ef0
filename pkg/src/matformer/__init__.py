"""MatFormer: nested transformers with Mix'n'Match submodel extraction."""

import os

# MATFORMER_THREADS caps BLAS threads; it only takes effect if set before
# numpy is first imported, which importing this package does.
_threads = os.environ.get("MATFORMER_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
