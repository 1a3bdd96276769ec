from . import checkpoint, data, metrics, scoring, tensor, vae
