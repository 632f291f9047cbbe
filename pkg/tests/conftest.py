import hypothesis

hypothesis.settings.register_profile(
    "ci", derandomize=True, deadline=None, max_examples=25
)
hypothesis.settings.load_profile("ci")
