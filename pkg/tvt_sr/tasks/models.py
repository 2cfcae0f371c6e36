from typing import Optional, Annotated
from pydantic import BaseModel, field_validator, AfterValidator, ConfigDict
from ..base.catalog import preset_tags, PresetKind
from .validators import validate_regex, validate_filename, validate_workdir, validate_existing_file
from .utils import DEFAULT_WORKDIR


def validate_experiment_preset(tag: str) -> str:
    options = preset_tags(PresetKind.EXPERIMENT)
    if tag not in options:
        raise ValueError(f'"{tag}" is not a valid experiment preset. Options are: {", ".join(sorted(options))}.')

    return tag


ExperimentPreset = Annotated[str, AfterValidator(validate_experiment_preset)]


# Models
class TaskArgs(BaseModel):
    model_config = ConfigDict(extra='forbid')


class TableTaskArgs(TaskArgs):
    exclude: Optional[str] = None
    include: Optional[str] = None
    save_csv: Optional[str] = None
    save_json: Optional[str] = None

    # Validators
    check_regex = field_validator('exclude', 'include')(validate_regex)
    check_filename = field_validator('save_csv', 'save_json')(validate_filename)


class ExperimentTaskArgs(TableTaskArgs):
    """ Options shared by the tasks operating on an experiment work directory """
    config: Optional[str] = None
    preset: Optional[ExperimentPreset] = None
    seed: Optional[int] = None
    resume: Optional[str] = None
    workdir: str = DEFAULT_WORKDIR

    # Validators
    check_config = field_validator('config', 'resume')(validate_existing_file)


class ExistingWorkdirTaskArgs(ExperimentTaskArgs):
    check_workdir = field_validator('workdir')(validate_workdir)
