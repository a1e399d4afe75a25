"""Conditional-deformable cVAE-GAN for view translation, on a small numpy autodiff core."""
from .kernels import BACKEND
from .tensor import Graph, Tensor, backward, default_dtype, grad_check, no_grad
from .optim import Adam
from .cdm import CDM, CdmConfig, ViewLabel
from .dfnm import DfnmLayer
from .networks import DAC, Decoder, Discriminator, Encoder, Model, NetworkSpec
from .trainer import TrainConfig, load_config, load_model, run, synthesize
from .data import SpinnerSpec, generate_spinner_dataset, load_directory_dataset
from .metrics import eval_l1, eval_ssim

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Graph", "Tensor", "backward", "default_dtype", "grad_check", "no_grad",
    "Adam", "CDM", "CdmConfig", "ViewLabel", "DfnmLayer",
    "DAC", "Decoder", "Discriminator", "Encoder", "Model", "NetworkSpec",
    "TrainConfig", "load_config", "load_model", "run", "synthesize",
    "SpinnerSpec", "generate_spinner_dataset", "load_directory_dataset",
    "eval_l1", "eval_ssim", "__version__",
]
