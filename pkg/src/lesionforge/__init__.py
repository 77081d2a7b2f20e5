"""Semi-supervised lesion segmentation with denoising autoencoders."""
__version__ = "0.1.0"
