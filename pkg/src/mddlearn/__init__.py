"""Max-diversity distributed learning: MDD-LS / MDD-RKHS with ridge and kernel ridge baselines."""

from .baselines import (
    KernelShard,
    LinearModel,
    ModelRecord,
    ShardedKernelModel,
    predict,
    train_drr,
    train_kdrr,
    train_krr,
    train_rr,
)
from .data import Dataset, Partition, parse_libsvm, partition, split_train_test, standardize
from .linalg import KernelConfig, fast_inverse_apply, kernel_matrix, linear_gram, solve, spd_factorize
from .mdd import (
    RoundTrace,
    TrainConfig,
    diversity_linear,
    diversity_rkhs,
    loo_average,
    mdd_ls_train,
    mdd_rkhs_train,
)

__version__ = "0.1.0"
