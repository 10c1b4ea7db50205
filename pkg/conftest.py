# `actiontx.plugin` is normally loaded through its `pytest11` entry point. Listing
# it here as well lets the tests run from a plain checkout with PYTHONPATH=src;
# both routes register it under the same name, so it is only loaded once.
pytest_plugins = ["pytester", "actiontx.plugin"]
