"""psoctseg: multi-class segmentation toolkit for polar intravascular
PS-OCT images, with a phantom generator, multi-term training losses, a
label-quality critic, topology post-processing, and boundary metrics."""

__version__ = "0.1.0"
