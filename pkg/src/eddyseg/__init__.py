"""Mesoscale eddy segmentation toolkit.

A from-scratch rank-4 autodiff engine drives a symmetric encoder/decoder
network with dilated convolutions and additive lateral connections, trained
with a combined dice + cross-entropy loss on synthetic multivariate ocean
fields (SSH, SST, U, V).
"""

__version__ = "0.1.0"
