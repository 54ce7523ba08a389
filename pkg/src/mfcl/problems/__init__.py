from .pendulum import PendulumProblem, PendulumSpec, pendulum_residual
from .allen_cahn import (AllenCahnProblem, AllenCahnSpec, allen_cahn_ic,
                         allen_cahn_ic_bc_batch, allen_cahn_residual)
from .tabular import (TabularProblem, TabularTaskSet, load_tabular,
                      synth_seasonal)

__all__ = [
    "PendulumProblem", "PendulumSpec", "pendulum_residual",
    "AllenCahnProblem", "AllenCahnSpec", "allen_cahn_ic",
    "allen_cahn_ic_bc_batch", "allen_cahn_residual",
    "TabularProblem", "TabularTaskSet", "load_tabular", "synth_seasonal",
]
