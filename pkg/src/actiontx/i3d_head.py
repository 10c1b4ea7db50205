from . import tensor as T
from .layers import Conv3d, Initializer, Module
from .tensor import Tensor
from .tx_head import HeadOutput, HeadOutputs


class I3DHead(Module):
    """Context-free head: two 3-D convolutions over the pooled tube only,
    global average, then the classification and regression layers.
    """

    def __init__(self, init: Initializer, features, num_classes, channels=32,
                 class_agnostic=True, name="i3d_head"):
        self.first = Conv3d(init, f"{name}.block0", features, channels)
        self.second = Conv3d(init, f"{name}.block1", channels, channels)
        self.outputs = HeadOutputs(init, f"{name}.outputs", channels, num_classes,
                                   class_agnostic)

    def __call__(self, tube: Tensor) -> HeadOutput:
        """`tube` is ``(R, T', 7, 7, F)`` from ST-RoIPool."""
        x = T.relu(self.first(tube))
        x = T.relu(self.second(x))
        return self.outputs(T.mean(x, axis=(1, 2, 3)))
