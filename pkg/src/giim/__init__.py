"""Multi-heterogeneous graph classification of multi-view cases with missing-view imputation."""

from .autodiff import Tensor, backward, parameter
from .data import Dataset, Manifest, SyntheticSpec, generate_synthetic, load_dataset, save_dataset, split_by_patient
from .graph import HeteroGraph, LesionRecord, PatientCase, build_exam_graph, build_lesion_graph, edge_counts
from .imputation import FeatureDatabase, Imputer, ImputerKind
from .model import MhgModel, NnBaseline
from .training import EvalMode, EvalReport, TrainConfig, auc_binary, evaluate, train, train_baseline

__version__ = "0.1.0"
