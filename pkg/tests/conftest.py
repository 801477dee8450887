import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, limit_s): acceptance criterion with a time limit")
    config._criteria = {}


def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        item.user_properties.append(("criterion", mark.args[0]))


def pytest_report_teststatus(report, config):
    props = dict(report.user_properties)
    if "criterion" in props and (report.when == "call" or not report.passed):
        n = props["criterion"]
        if config._criteria.get(n, ("PASS",))[0] == "PASS":
            config._criteria[n] = ("PASS" if report.passed else "FAIL", report.nodeid)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config._criteria
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        outcome, nodeid = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {outcome}  ({nodeid.split('::')[-1]})")
