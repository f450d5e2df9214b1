"""Segmentation-prior fusion and KITTI 3D evaluation toolkit."""
