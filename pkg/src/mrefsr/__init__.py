"""Multi-reference x4 super-resolution on a small numpy autograd core."""

from .align import OffsetField, align_reference, match_offsets
from .errors import ContractViolation, ManifestError
from .gradcheck import grad_check
from .mam import attention_weights, mam_forward
from .metrics import bicubic_resize, psnr, psnr_y, rgb_to_y, ssim_y, y_metrics
from .model import ModelConfig, MrefsrModel, extract_features, predict
from .pipeline import RefGroupSample, eval_group, forward_sr, l_rec, train, train_step
from .safm import compute_masks, safm_forward
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
