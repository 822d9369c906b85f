"""icobridge: Brownian-bridge diffusion forecasting of per-vertex scalar
fields on icosphere meshes, with a small numpy autodiff engine underneath."""

__version__ = "0.1.0"
