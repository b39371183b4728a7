from hypothesis import HealthCheck, settings

# Single-core CI boxes make per-example deadlines meaningless.
settings.register_profile(
    "cooploc",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("cooploc")
