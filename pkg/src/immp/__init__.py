"""Mass-penalized constrained integrators and exact-sampling Monte Carlo.

Selected fast degrees of freedom of a Hamiltonian system are slowed down by
an implicit mass penalty realized through auxiliary variables and algebraic
constraints.  The package ships the constrained leapfrog integrators, the
Metropolis-corrected sampler with momentum flip, reference models (united
atom alkane chain, harmonic particle chain, small test systems) and the
analysis tools used to measure stability and sampling efficiency.
"""

from immp.geometry import (
    ConstraintMap,
    MassSpec,
    PenaltySpec,
    SingularGeometryError,
)
from immp.integrators import (
    ImmpSystem,
    IntegratorConfig,
    PhaseState,
    StepOutcome,
    fluctuation_dissipation_step,
    rattle_immp_split_step,
    rattle_immp_step,
    rattle_rigid_step,
    verlet_step,
)
from immp.sampling import ChainStats, ExperimentRecord, ThermostatSpec, ghmc_step, run_chain

__version__ = "0.1.0"
