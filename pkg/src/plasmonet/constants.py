"""Physical constants (SI) and fixed problem-level defaults."""

# exact SI values
C0 = 299792458.0              # vacuum speed of light, m/s
MU0 = 1.25663706212e-06       # vacuum permeability, H/m
EPS0 = 1.0 / (MU0 * C0 * C0)  # vacuum permittivity, F/m

# unit-cell geometry, fixed for the whole study
LATTICE_NM = 500.0            # square lattice period
FILM_THICKNESS_NM = 50.0      # silver film thickness
SUBSTRATE_INDEX = 1.5         # glass, nondispersive

# silver Drude model; chosen once, used identically by every solver
SILVER_EPS_INF = 3.7
SILVER_OMEGA_P = 1.38e16      # plasma frequency, rad/s
SILVER_GAMMA = 2.73e13        # collision rate, rad/s

# spectral window
LAMBDA_MIN_NM = 800.0
LAMBDA_MAX_NM = 1700.0
