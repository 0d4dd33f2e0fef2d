"""Template banks plus per-layer coefficients as a compact parameterisation of deep networks."""
from .core import (CoefficientSet, Head, ModuleKind, ParamAccount, RecastConfig, RecastModel, TemplateBank,
                   forward_backbone, forward_module, generate_weight, group_index, param_accounting,
                   savings_closed_form)
from .diagnostics import (DiagnosticsReport, coefficient_similarity, diagnose, frobenius_diversity, sv_entropy,
                          svd_small, template_entropy)
from .exceptions import (BudgetExceededError, FormatError, NonFiniteError, NumericalError, RecastError,
                         ShapeError, TopologyError, TrainingError, UndefinedMetricError)
from .integrate import AdapterSpec, combine_dora, combine_lora, combine_mask, combine_rosa, merge
from .mimicry import MimicryConfig, ReconstructionReport, TeacherModel, cosine_similarity, run_mimicry
from .tensor import Tensor, no_grad
from .til import (ParamBudget, SequenceResult, TaskSnapshot, TaskSpec, TrainConfig, make_task_suite,
                  pretrain_teacher, restore, run_sequence, train_task)

__version__ = "0.1.0"
