"""Vision-Mamba super-resolution in numpy: model, complexity profiler,
image pipeline and a teacher-student distillation trainer."""

from .autodiff import Tensor, backward, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .imaging import Image, bicubic_resize, read_png, rgb_to_y, write_png
from .metrics import MetricReport, psnr, ssim
from .model import ModelConfig, build_model, dvmsr_forward, param_specs, preset
from .profiler import ProfileReport, count_activations, count_flops, count_params, profile
from .ssm import selective_scan, zoh_discretize
from .train import DistillConfig, TrainConfig, adam_step, distill_loss, l1_loss, l2_loss, lr_at, train

__version__ = "0.1.0"
