"""Progressive confounder imputation toolkit.

Subpackages and modules:

- :mod:`proci.data` - dataset model, validation, splitting, augmentation
- :mod:`proci.bench` - semi-synthetic benchmark generators
- :mod:`proci.kernels` - kernel conditional-independence test and CMI
- :mod:`proci.oracle` - pluggable variable/value oracles (scripted and HTTP)
- :mod:`proci.imputation` - confounder sampling and potential-outcome tables
- :mod:`proci.loop` - the progressive generate/impute/validate procedure
- :mod:`proci.estimators` - S-learner, PSM, TARNet, CFR-Wasserstein
- :mod:`proci.metrics` - effect-estimation error metrics
- :mod:`proci.harness` - experiment runner and grid search
"""

__version__ = "0.1.0"
