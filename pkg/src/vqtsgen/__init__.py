"""Vector-quantized time series generation with learned refinement.

A desk-scale toolkit: a numpy autodiff substrate, a VQ tokenizer plus
masked-token prior for generating series, a U-Net that refines synthetic
outputs toward the data distribution, and ROCKET/FCN-based FID, IS and
conditional-FID metrics to quantify the gain.
"""

__version__ = "0.1.0"
