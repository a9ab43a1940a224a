"""Target-instructed diffusion enhancing at desk scale."""
