"""Physical constants and unit conversions.

Energies are carried internally as frequencies in GHz (h = 1). Times are in ns
unless a name says otherwise, so a rate in GHz is a rate per ns.
"""

import scipy.constants as _sc

#: 1 cm^-1 expressed in GHz (c in cm/ns).
CM_TO_GHZ = 29.9792458
#: Bohr magneton over h, GHz/T.
MU_B = 13.9962449
#: Boltzmann constant over h, GHz/K.
K_B = 20.836619

#: mu_0 mu_B^2 / (4 pi h r^3) for r = 1 Angstrom, in GHz.
DIPOLAR_GHZ_A3 = _sc.mu_0 / (4.0 * _sc.pi) * _sc.physical_constants["Bohr magneton"][0] ** 2 / _sc.h / 1e-30 / 1e9

GHZ_TO_MHZ = 1e3
MT = 1e-3  # one millitesla in tesla
US = 1e3  # one microsecond in ns

#: Nuclear-spin-bath T2 ceiling (us); reference overlay only, never enters dynamics.
T2_SPIN_BATH_US = 300.0


def cm_to_ghz(x):
    return x * CM_TO_GHZ


def ghz_to_cm(x):
    return x / CM_TO_GHZ
