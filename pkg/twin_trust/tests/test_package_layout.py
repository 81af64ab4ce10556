from pathlib import Path

PACKAGE_DIR = Path(__file__).resolve().parents[1]


class TestModuleHeaders:

    def test_modules_start_without_path_comment(self) -> None:
        """Modules open with their imports or docstring, never a path comment."""
        headed = [
            str(path.relative_to(PACKAGE_DIR))
            for path in sorted(PACKAGE_DIR.rglob("*.py"))
            if path.read_text(encoding="utf-8").lstrip().startswith("# twin_trust/")
        ]
        assert headed == []
