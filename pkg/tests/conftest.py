import os

import pytest


@pytest.fixture(autouse=True, scope="session")
def _oracle_cache(tmp_path_factory):
    """Keep oracle caches out of the user's home directory during tests."""
    if "POLICY_ZOOM_CACHE" not in os.environ:
        os.environ["POLICY_ZOOM_CACHE"] = str(tmp_path_factory.mktemp("oracle-cache"))
    yield
