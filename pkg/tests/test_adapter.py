from pathlib import Path

from common.platform import EnvironmentAdapter


def test_getenv_uses_injected_environment():
    env = EnvironmentAdapter(environ={"OCCRENDER_WORKERS": "3"})
    assert env.getenv("OCCRENDER_WORKERS") == "3"
    assert env.getenv("MISSING", "x") == "x"


def test_normalize_path_is_relative_to_cwd(tmp_path):
    env = EnvironmentAdapter(environ={}, cwd=tmp_path)
    assert env.cwd() == tmp_path
    assert env.normalize_path("runs/a") == str((tmp_path / "runs" / "a").resolve())
    assert env.normalize_path(str(tmp_path / "b")) == str((tmp_path / "b").resolve())


def test_platform_info_keys():
    info = EnvironmentAdapter().get_platform_info()
    assert {"system", "python", "cpu_count"} <= set(info)
    assert info["cpu_count"] >= 1


def test_resource_lookup_order(tmp_path):
    config_dir = tmp_path / "configs" / "variants"
    config_dir.mkdir(parents=True)
    (tmp_path / "configs" / "shared.json").write_text("{}", encoding="utf-8")
    (config_dir / "local.json").write_text("{}", encoding="utf-8")
    (tmp_path / "root.json").write_text("{}", encoding="utf-8")
    env = EnvironmentAdapter(environ={}, cwd=tmp_path)
    context = {"config_dir": config_dir, "project_root": tmp_path}
    assert env.resolve_resource_path("local.json", context) == (config_dir / "local.json").resolve()
    assert env.resolve_resource_path("shared.json", context) == (tmp_path / "configs" / "shared.json").resolve()
    assert env.resolve_resource_path("root.json", context) == (tmp_path / "root.json").resolve()
    assert env.resolve_resource_path("nope.json", context) == (config_dir / "nope.json").resolve()
    absolute = tmp_path / "root.json"
    assert env.resolve_resource_path(str(absolute), context) == absolute
    assert isinstance(env.resolve_resource_path("x", {}), Path)
