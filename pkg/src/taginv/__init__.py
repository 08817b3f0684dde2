"""
taginv: tag-free cine synthesis and motion estimation from tagged MRI.

A diffusion-style posterior sampler recovers the reference anatomy while
differential evolution and Adam fit the tag pattern, blur, fading and a
diffeomorphic motion field, alternating block by block.
"""

import numba

# the portable pool avoids a TBB version warning; results do not depend on it
numba.config.THREADING_LAYER = "workqueue"

__version__ = "0.1.0"
