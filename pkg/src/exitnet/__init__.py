"""Early-exit dynamic neural networks on numpy.

A self-contained toolkit: a reverse-mode autodiff engine, multi-exit CNN
construction and training, dynamic early-exit inference, white-box and
surrogate-based black-box adversarial attacks, and the evaluation metrics
used to study them.
"""

__version__ = "0.1.0"

from .attacks import (AttackOutcome, BudgetedAttackConfig, EarlyAttackConfig,
                      alpha_sweep, early_attack, early_attack_loss,
                      early_attack_success, fgsm, mifgsm, pgd)
from .autodiff import Tensor, finite_diff_grad
from .blackbox import (CorruptionSpec, LabelOracle, SurrogateDataset, TransferPair,
                       corrupt, harvest_labels, run_transfer, train_surrogate)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, load_tensor_file, save_tensor_file, synthetic_dataset
from .inference import (ExitPolicy, PredictionTrace, calibrate_thresholds,
                        infer_all_exits, infer_dynamic, trace_batch)
from .metrics import (Histogram, SampleRecord, StudyReport, density_histogram,
                      exit_delta, first_flipped_exit, psnr, success_rate, t1_t2)
from .models import ArchitectureSpec, MultiExitModel, build_model, preset_spec
from .studies import run_study
from .training import TrainingConfig, train

__all__ = [
    "__version__",
    "Tensor", "finite_diff_grad",
    "ArchitectureSpec", "MultiExitModel", "build_model", "preset_spec",
    "Dataset", "synthetic_dataset", "save_tensor_file", "load_tensor_file",
    "TrainingConfig", "train",
    "save_checkpoint", "load_checkpoint",
    "ExitPolicy", "PredictionTrace", "infer_all_exits", "infer_dynamic",
    "trace_batch", "calibrate_thresholds",
    "BudgetedAttackConfig", "EarlyAttackConfig", "AttackOutcome",
    "fgsm", "pgd", "mifgsm", "early_attack", "early_attack_loss",
    "early_attack_success", "alpha_sweep",
    "CorruptionSpec", "LabelOracle", "SurrogateDataset", "TransferPair",
    "corrupt", "harvest_labels", "train_surrogate", "run_transfer",
    "SampleRecord", "StudyReport", "Histogram", "success_rate", "exit_delta",
    "first_flipped_exit", "t1_t2", "psnr", "density_histogram",
    "run_study",
]
