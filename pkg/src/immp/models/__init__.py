from immp.models.alkane import AlkaneModel, alkane_system, butane_system
from immp.models.chain import HarmonicChain
from immp.models.simple import (
    DoubleWellModel,
    QuadraticModel,
    StiffRadialModel,
    pendulum_system,
    quadratic_penalized_system,
    stiff_system,
)
