"""gtforge: LiDAR-derived sparse disparity ground truth for aerial epipolar stereo.

Pipeline stages: camera/LiDAR registration refinement, epipolar pair
selection, occlusion-aware point projection into rectified pairs, a
census-SGM baseline matcher, and an evaluation suite (N-pixel errors,
seen/occluded splits, base-to-height binning, relative shift gain,
change filtering).
"""

__version__ = "0.1.0"
