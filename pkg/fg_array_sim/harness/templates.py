"""
Named experiment templates.

A template is a JSON file in the templates directory holding metadata
(name, description, author, version) and a `config` object that is a
complete or partial ExperimentConfig.
"""

import copy
import json
from pathlib import Path
from typing import Dict, List, Optional

from loguru import logger

from ..errors import ConfigError
from ..settings import get_settings
from .config import ExperimentConfig, load_config, parse_config

DEFAULT_TEMPLATES_DIR = Path(__file__).resolve().parents[2] / "templates"


def default_templates_dir() -> Path:
    return get_settings().templates_dir or DEFAULT_TEMPLATES_DIR


class TemplateEngine:
    """
    Lists, loads and applies experiment templates.

    Example:
        >>> engine = TemplateEngine(Path("templates"))
        >>> config = engine.apply("tune_sequence", overrides={"seed": 3})
    """

    def __init__(self, templates_dir: Optional[Path] = None):
        """
        Initialize template engine.

        Args:
            templates_dir: Directory containing template JSON files
        """
        self.templates_dir = Path(templates_dir or default_templates_dir())
        if not self.templates_dir.exists():
            raise ConfigError(f"Templates directory not found: {self.templates_dir}")

    def list_templates(self) -> List[Dict[str, str]]:
        """
        List available templates with metadata.

        Returns:
            List of template info dicts with name, description, version
        """
        templates = []
        for template_file in self.templates_dir.glob("*.json"):
            try:
                template = json.loads(template_file.read_text(encoding="utf-8"))
                templates.append({
                    "name": template.get("name", template_file.stem),
                    "description": template.get("description", "No description"),
                    "version": template.get("version", "unknown"),
                    "author": template.get("author", "unknown"),
                    "file": str(template_file),
                })
            except Exception as e:
                logger.warning(f"Failed to read template {template_file}: {e}")

        return sorted(templates, key=lambda x: x["name"])

    def load_template(self, name: str) -> Dict:
        """
        Load template by name.

        Args:
            name: Template name (without .json extension)

        Returns:
            Template dictionary (metadata plus `config`)

        Raises:
            ConfigError: If template not found or not valid JSON
        """
        template_path = self.templates_dir / f"{name}.json"
        if not template_path.exists():
            raise ConfigError(f"Template not found: {name}")
        try:
            return json.loads(template_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid template JSON: {e}") from e

    def apply(self, name: str, overrides: Optional[Dict] = None) -> ExperimentConfig:
        """
        Build an ExperimentConfig from a template plus top-level overrides.

        Sections in `overrides` are merged key by key into the template's.
        """
        template = self.load_template(name)
        if "config" not in template:
            raise ConfigError(f"Template '{name}' has no 'config' object")
        merged = self._merge_overrides(template["config"], overrides or {})
        return parse_config(merged)

    def validate_template(self, name: str) -> bool:
        try:
            self.apply(name)
        except ConfigError as e:
            logger.error(f"Template '{name}' is invalid: {e}")
            return False
        return True

    @staticmethod
    def _merge_overrides(config: Dict, overrides: Dict) -> Dict:
        merged = copy.deepcopy(config)
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key] = {**merged[key], **value}
            else:
                merged[key] = value
        return merged


def resolve_config(source: str, templates_dir: Optional[Path] = None) -> ExperimentConfig:
    """
    Load `source` as a config file path, or else as a bundled template name.

    Raises:
        ConfigError: Neither a readable file nor a known template
    """
    path = Path(source)
    if path.suffix == ".json" or path.exists():
        return load_config(path)
    return TemplateEngine(templates_dir).apply(source)
