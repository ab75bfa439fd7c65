from .evaluate import EvalReport, evaluate
from .losses import charbonnier, multiscale_loss
from .metrics import psnr, ssim
