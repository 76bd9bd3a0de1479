import pytest

from consistency_ft.rules_dsl import fixture_path, load_groundings, load_rules, parse_rules


@pytest.fixture(scope="session")
def tu_dat():
    return load_rules(fixture_path("tu_dat.rules"))


@pytest.fixture(scope="session")
def rear_end(tu_dat):
    return load_groundings(fixture_path("rear_end.groundings"), tu_dat)


@pytest.fixture(scope="session")
def scenario_db():
    return load_rules(fixture_path("scenario.rules"))


@pytest.fixture(scope="session")
def small_db():
    """Three classes, one proxy assertion each."""
    return parse_rules(
        "pred p/1\n"
        "pred q/2\n"
        "class main 1 \"one\"\nclass main 2 \"two\"\nclass main 3 \"three\"\n"
        "class aux 1 \"one\"\nclass aux 2 \"two\"\nclass aux 3 \"three\"\n"
        "assert a1(X): p(X)\n"
        "assert a2(X,Y): q(X,Y)\n"
        "assert a3(X,Y): p(X) & !q(X,Y)\n"
        "proxy a1, a2, a3\n"
        "implies main 1 => a1\nimplies main 2 => a2\nimplies main 3 => a3\n"
        "implies aux 1 => a1\nimplies aux 2 => a2\nimplies aux 3 => a3\n")
