import os

import pytest


def pytest_collection_modifyitems(config, items):
    if os.getenv('HRTF_RUN_SLOW', '').strip() == '1':
        return
    skip_slow = pytest.mark.skip(reason="slow acceptance run; set HRTF_RUN_SLOW=1")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)
