import pytest

from difftwin.facility import FacilityParams
from difftwin.runner import prepare_models

MODEL_SEED = 123


@pytest.fixture(scope="session")
def facility_params():
    return FacilityParams()


@pytest.fixture(scope="session")
def prepared_models(facility_params):
    """Session-wide trained sorter network and fitted drum parameters."""
    return prepare_models(facility_params, seed=MODEL_SEED)
