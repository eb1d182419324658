"""Learned and random sketches for iterative Hessian sketching, sketch-preconditioned regression and oracle-split embeddings."""

from .constraints import ConstraintSpec, project_nuclear_ball, project_simplex, prox_l1
from .estimate import SpectralEstimates, estimate_z, exact_z, leverage_scores
from .fastreg import IterationCapExceeded, fast_regression_solve, newton_driver
from .ihs import SolverNotConverged, Task, hessian_sketch_select, reference_solution, run_ihs
from .learn import TrainConfig, TrainedSketchSequence, train_sequence, train_sketch
from .sketch import (CountSketchType, GaussianSketch, OracleSplitSketch, SJLT, make_countsketch,
                     make_gaussian, make_sjlt)

__version__ = "0.1.0"
