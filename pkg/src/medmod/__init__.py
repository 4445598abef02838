from .regress import DataTable, ModelFormula, fit_ols
__version__ = "0.1.0"
