import numpy as np
import pytest

from countyrisk.data import PREDICTOR_NAMES, CountyRecord, FeatureMatrix


def make_matrix(X, y, names=None) -> FeatureMatrix:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    names = names or [f"f{j}" for j in range(X.shape[1])]
    return FeatureMatrix(
        column_names=list(names),
        values=X,
        missing_mask=np.zeros(X.shape, dtype=bool),
        outcome=y,
        row_fips=[f"{10001 + i:05d}" for i in range(X.shape[0])],
    )


def make_record(
    fips="01001",
    name="Test County",
    population=100_000,
    deaths=30,
    smr=1.0,
    suppressed=False,
    burden=0.5,
    treatment_desert=False,
    rural=False,
    **predictor_values,
) -> CountyRecord:
    predictors = np.zeros(len(PREDICTOR_NAMES))
    for key, value in predictor_values.items():
        predictors[PREDICTOR_NAMES.index(key)] = value
    predictors[PREDICTOR_NAMES.index("treatment_desert")] = float(treatment_desert)
    predictors[PREDICTOR_NAMES.index("rural")] = float(rural)
    return CountyRecord(
        fips=fips,
        name=name,
        population=population,
        deaths=deaths,
        smr=smr,
        predictors=predictors,
        suppressed=suppressed,
        treatment_desert=treatment_desert,
        rural=rural,
        burden_score=burden,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
