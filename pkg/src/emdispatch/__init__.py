"""Battery-aware dispatch for a grid-connected local energy system.

Pipeline: a surrogate electrochemical cell simulator (`emcore`) feeds an
offline linear characterization (`lpc`), whose planes drive matrix-form
state recursions (`state_update`) and MILP dispatch models (`dispatch`)
solved through `milp`.  Solved plans are replayed against the simulator
by `evaluator`; `cli` ties the stages together.
"""

__version__ = "0.1.0"

from . import emcore, lpc, state_update, milp, scenario, dispatch, evaluator

__all__ = ["emcore", "lpc", "state_update", "milp", "scenario",
           "dispatch", "evaluator", "__version__"]
