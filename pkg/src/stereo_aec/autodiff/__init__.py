from .tensor import (GraphError, Tensor, abs_, add, as_tensor, concat, concat_channels, elu, flip,
                     getitem, log, no_grad, matmul, mean, minimum_const, mul, neg, permute, reshape,
                     sigmoid, split_channels, sqrt, square, stack, tanh, tsum)
from .nn import Parameter, conv2d_freq, deconv2d_freq, istft, linear, lstm_seq, lstm_step
from .gradcheck import GradCheckReport, finite_diff_check
