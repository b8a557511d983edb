"""Anderson-accelerated unrolled half-quadratic splitting for EIT."""
from .anderson import AaConfig, aa_iterate, solve_alpha
from .estimators import GNLMReconstructor, HQSNetReconstructor
from .fem import ForwardModel, MeasurementSet, StimProtocol, opposite_adjacent_protocol
from .mesh import ElectrodeConfig, Mesh, build_disk_mesh
from .metrics import dr, eiei, evaluate, mse, ssim_mesh
from .newton import gauss_newton_aa, gauss_newton_solve, gn_lm_baseline, newton_aa_benchmark
from .pipeline import ReconConfig, TrainConfig, aa_hqsnet_reconstruct, hqsnet_reconstruct, train
from .proxnet import ProxNetParams, aa_lpgd, init_params
from .simdata import Dataset, build_dataset, load_dataset, save_dataset

__version__ = "0.1.0"

__all__ = [
    "AaConfig", "aa_iterate", "solve_alpha",
    "GNLMReconstructor", "HQSNetReconstructor",
    "ForwardModel", "MeasurementSet", "StimProtocol", "opposite_adjacent_protocol",
    "ElectrodeConfig", "Mesh", "build_disk_mesh",
    "dr", "eiei", "evaluate", "mse", "ssim_mesh",
    "gauss_newton_aa", "gauss_newton_solve", "gn_lm_baseline", "newton_aa_benchmark",
    "ReconConfig", "TrainConfig", "aa_hqsnet_reconstruct", "hqsnet_reconstruct", "train",
    "ProxNetParams", "aa_lpgd", "init_params",
    "Dataset", "build_dataset", "load_dataset", "save_dataset",
]
