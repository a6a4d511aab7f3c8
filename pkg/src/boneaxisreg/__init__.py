"""2D-3D rigid registration of bone volumes to single-plane projection images."""
import os
import warnings

# DE evaluates trial poses from several threads, each launching the parallel
# ray-caster; the default workqueue layer aborts on concurrent launches
os.environ.setdefault("NUMBA_THREADING_LAYER", "threadsafe")
# an outdated TBB is skipped in favour of OpenMP; the warning is noise
warnings.filterwarnings("ignore", message="The TBB threading layer requires")

__version__ = "0.1.0"
