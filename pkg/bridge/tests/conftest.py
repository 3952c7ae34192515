import pytest

pytest.importorskip("grounder_bridge")
