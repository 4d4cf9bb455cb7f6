"""quadfuse: desk-scale four-modality BEV 3D detection pipeline.

Synthetic RGB / gated / LiDAR / radar scenes, depth-guided cross-modal
feature blending, distance-weighted LiDAR-radar BEV fusion, a small query
decoder trained with Hungarian matching, and KITTI-style AP evaluation.
"""

__version__ = "0.1.0"
