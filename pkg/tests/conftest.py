import pytest
from importlib import resources

from aemonitor.data_model import parse_dataset


def bundled(name: str) -> str:
    return (resources.files("aemonitor") / f"data/{name}").read_text()


@pytest.fixture(scope="session")
def case_csv() -> str:
    return bundled("case_study.csv")


@pytest.fixture(scope="session")
def schema_json() -> str:
    return bundled("schema.json")


@pytest.fixture(scope="session")
def scenarios_json() -> str:
    return bundled("scenarios.json")


@pytest.fixture(scope="session")
def case_dataset(case_csv, schema_json):
    return parse_dataset(case_csv, schema_json)
