def pytest_configure(config):
    config.addinivalue_line(
        "markers", "integration: exercises the simulator CLI end to end"
    )
