import pytest
import torch

torch.set_num_threads(1)


def write_lines(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")
    return str(path)


@pytest.fixture
def toy_dir(tmp_path):
    """The 3-triple toy KB: a r1 b / b r1 c / a r2 c."""
    write_lines(tmp_path / "train.txt", ["a\tr1\tb", "b\tr1\tc", "a\tr2\tc"])
    write_lines(tmp_path / "valid.txt", [])
    write_lines(tmp_path / "test.txt", [])
    write_lines(tmp_path / "entity_names.txt", ["a\tAlpha  Town", "b\tbeta", "c\tGamma city"])
    write_lines(tmp_path / "relation_names.txt", ["r1\tlinks to", "r2\tnear"])
    return tmp_path


@pytest.fixture
def toy_kb(toy_dir):
    from cear.kb import load_kb_dir

    return load_kb_dir(str(toy_dir))


# ---- acceptance summary ------------------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "outcomes": [], "details": []})
    entry["outcomes"].append(rep.outcome)
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        outcomes = entry["outcomes"]
        if "failed" in outcomes:
            status = "FAIL"
        elif "passed" in outcomes:
            status = "PASS"
        else:
            status = "SKIP"
        line = f"{status}  {number:>2}  {entry['title']}"
        if entry["details"]:
            line += "  [" + "; ".join(dict.fromkeys(entry["details"])) + "]"
        terminalreporter.write_line(line)
