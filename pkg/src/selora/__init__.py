"""Low-rank adapters that grow their rank when an empirical Fisher-information test passes."""

from .adapter import ExpansionEvent, RankCapReached, SeLoRALinear, load_adapters, save_adapters
from .autodiff import Parameter, ShapeError, Tape, UsageError, Var, backward, grad
from .fisher import ExpansionPolicy, FisherEstimate, empirical_fisher, evaluate_expansions, fi_ratio, fi_score
from .harness import NumericalError, RunReport, TrainConfig, lambda_sweep, rank_report, spearman, train

__version__ = "0.1.0"
