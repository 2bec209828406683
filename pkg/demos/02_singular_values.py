"""
Convolutions as products of singular factors
=============================================

A convolution weight of shape (C_out, C_in, K, K) folds into a
C_out x (C_in K K) matrix. Its singular value decomposition splits the
layer into a K x K convolution with orthonormal filters, a per-channel
scale and a 1x1 mixing convolution. Only the scales are fine-tuned later.
"""

import numpy as np

from svddip.autodiff import Tensor, ops
from svddip.model import DESK_UNET, LayerAddress, UNetConfig, build_unet, default_svd_addresses, replace_with_svd
from svddip.svd import TruncationPolicy, factorize_conv, fold, svd_decompose

rng = np.random.default_rng(0)
w = rng.standard_normal((4, 3, 3, 3))
x = rng.standard_normal((3, 10, 10))

# Folding is a plain reshape; the factors come from a one-sided Jacobi SVD.
folded = fold(w)
factors = svd_decompose(folded.matrix)
print("folded shape:", folded.matrix.shape)
print("singular values:", np.round(factors.s, 4))
print("numpy agrees:", np.allclose(factors.s, np.linalg.svd(folded.matrix, compute_uv=False)))

# The factor kernels reproduce the original convolution.
u, s, v = factorize_conv(w)
direct = ops.conv2d(Tensor(x), Tensor(w)).data
composed = ops.conv2d(ops.channel_scale(ops.conv2d(Tensor(x), Tensor(v)), Tensor(s)), Tensor(u)).data
print("max difference of the two paths:", np.abs(direct - composed).max())

# A 128-channel 3x3 layer has 147456 weights but only 128 singular values.
big = build_unet(UNetConfig(channels=(128, 128), skip_channels=(0, 0)), 0)
addr = LayerAddress("down", 1, 1)
print("weights in", addr, ":", big.convs[addr].weight.size)
replace_with_svd(big, [addr])
print("singular values in", addr, ":", big.convs[addr].s.size)

# Swapping every block conv of the desk U-Net keeps its output unchanged.
net = build_unet(DESK_UNET, 0)
z = rng.standard_normal((1, 64, 64))
before = net(z).data
replace_with_svd(net, default_svd_addresses(net))
print("output change after factorising:", np.abs(net(z).data - before).max())
print("trainable singular values:", sum(layer.rank for layer in net.svd_layers().values()))

# Truncation keeps a fraction of the largest values per layer.
half = build_unet(DESK_UNET, 0)
replace_with_svd(half, default_svd_addresses(half), TruncationPolicy("rank_fraction", 0.5))
print("after keeping half of each rank:", sum(layer.rank for layer in half.svd_layers().values()))
