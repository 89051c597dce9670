"""Final-stage classifiers: one-vs-rest kernel SVM and random forest."""

from .svm import (SvmConfig, SvmModel, load_svm, save_svm,
                  svm_decision_values, svm_predict, svm_train)
from .forest import (RfConfig, RfModel, load_forest, rf_decision_values,
                     rf_predict, rf_train, save_forest)

__all__ = [
    "SvmConfig", "SvmModel", "svm_train", "svm_decision_values",
    "svm_predict", "save_svm", "load_svm",
    "RfConfig", "RfModel", "rf_train", "rf_predict", "rf_decision_values",
    "save_forest", "load_forest",
]
