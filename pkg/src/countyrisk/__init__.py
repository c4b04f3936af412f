"""County-level mortality risk analytics.

Library plus batch CLI implementing the full analysis pipeline over
tabular county data: standardized mortality ratios, gradient-boosted
tree regression with exact Shapley attribution, k-means risk
stratification with a four-quadrant early-warning classification, and
global/local spatial autocorrelation with permutation inference.
"""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    CountyRecord,
    FeatureMatrix,
    ReferenceRate,
    assemble_dataset,
    compute_burden_score,
    compute_reference_rate,
    compute_smr,
    feature_matrix,
    impute_medians,
    load_source,
    merge_by_fips,
    parse_fips,
    suppressed_profile,
)
from .models import (  # noqa: F401
    GBTModel,
    TrainConfig,
    fit_gbt,
    fit_lasso,
    fit_linear,
    fit_random_forest,
    load_model,
    predict,
    save_model,
)
from .attribution import (  # noqa: F401
    ShapResult,
    beeswarm_export,
    dependence_export,
    global_importance,
    tree_shap,
)
from .evaluation import (  # noqa: F401
    FoldPlan,
    MetricReport,
    compare_models,
    cross_validate,
    high_risk_recall,
    make_folds,
    metric_suite,
)
from .clustering import (  # noqa: F401
    ClusterModel,
    QuadrantLabel,
    classify_quadrants,
    kmeans,
    select_k,
    silent_risk_table,
    silhouette_score,
    treatment_desert_contrast,
    welch_t_test,
)
from .spatial import (  # noqa: F401
    LisaResult,
    SpatialWeights,
    build_weights,
    global_permutation_test,
    lisa_geojson,
    local_moran,
    morans_i,
)
