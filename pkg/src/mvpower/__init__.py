"""Power analysis for multivariate abundance data by copula simulation."""

__version__ = "0.1.0"

from .copula import CopulaModel, fa_param_count, fit_copula, simulate  # noqa: E402
from .effects import CoefficientMatrix, EffectSpec, effect_alt, effect_null  # noqa: E402
from .glm import (  # noqa: E402
    ManyGLMFit,
    ModelMatrix,
    build_model_matrix,
    diagnostics,
    ds_residuals,
    fit_manyglm,
    lr_statistic,
)
from .ingest import (  # noqa: E402
    AbundanceMatrix,
    Categorical,
    DesignFrame,
    Numeric,
    RunConfig,
    read_counts,
    read_design,
    write_counts,
)
from .power import (  # noqa: E402
    PowerResult,
    PowerSettings,
    extend_design,
    power_curve,
    powersim_critical,
    powersim_nested,
)
