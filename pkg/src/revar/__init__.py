"""Instance-conditional learned reweighting with a dropout-variance meta-objective."""

from revar.estimators import ReVarClassifier, ReVarRegressor

__version__ = "0.1.0"

__all__ = ["ReVarClassifier", "ReVarRegressor", "__version__"]
