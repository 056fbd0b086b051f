import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "cpu", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("cpu")


def seeded_randn(*shape, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)
