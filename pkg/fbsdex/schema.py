import enum
import math
from abc import ABC, ABCMeta, abstractmethod
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Type, TypeVar

from fbsdex.exceptions import ConfigValidationError

__all__ = [
    'Field',
    'Int',
    'Float',
    'String',
    'Bool',
    'EnumField',
    'Repeated',
    'SectionField',
    'OneOf',
    'one_of',
    'Section',
]


class Field(ABC):
    def __init__(self, *, default=None, required: bool = False):
        self.default = default
        self.required = required
        # name is set when the field is added to a section
        self.name: Optional[str] = None

    @abstractmethod
    def validate_value(self, value):
        raise NotImplementedError()

    def convert(self, value, path: str):
        """
        Turns a raw (already parsed) config value into the field value

        :raises:
            ValueError: when the value is invalid
        """
        self.validate_value(value)
        return value


class Int(Field):
    def __init__(
        self,
        *,
        min_value: Optional[int] = None,
        max_value: Optional[int] = None,
        default: Optional[int] = None,
        required: bool = False,
    ):
        super().__init__(default=default, required=required)
        self.min_value = min_value
        self.max_value = max_value

    def validate_value(self, value: int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(
                f"Expected a value of type 'int', "
                f"got {type(value).__name__!r} instead"
            )

        if self.min_value is not None and value < self.min_value:
            raise ValueError(
                f'Value {value!r} is less than min value {self.min_value!r}'
            )

        if self.max_value is not None and value > self.max_value:
            raise ValueError(
                f'Value {value!r} is greater than max value {self.max_value!r}'
            )


class Float(Field):
    def __init__(
        self,
        *,
        min_value: Optional[float] = None,
        max_value: Optional[float] = None,
        exclusive_min: bool = False,
        exclusive_max: bool = False,
        default: Optional[float] = None,
        required: bool = False,
    ):
        super().__init__(default=default, required=required)
        self.min_value = min_value
        self.max_value = max_value
        self.exclusive_min = exclusive_min
        self.exclusive_max = exclusive_max

    def validate_value(self, value: float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(
                f"Expected a value of type 'float' or 'int', "
                f"got value of type {type(value).__name__!r} instead"
            )

        if not math.isfinite(value):
            raise ValueError(f'Value {value!r} is not finite')

        if self.min_value is not None:
            if value < self.min_value or (self.exclusive_min and value == self.min_value):
                bound = 'greater than' if self.exclusive_min else 'at least'
                raise ValueError(f'Value {value!r} should be {bound} {self.min_value!r}')

        if self.max_value is not None:
            if value > self.max_value or (self.exclusive_max and value == self.max_value):
                bound = 'less than' if self.exclusive_max else 'at most'
                raise ValueError(f'Value {value!r} should be {bound} {self.max_value!r}')

    def convert(self, value, path: str) -> float:
        self.validate_value(value)
        return float(value)


class String(Field):
    def validate_value(self, value: str):
        if not isinstance(value, str):
            raise ValueError(
                f"Expected a value of type 'str', "
                f"got {type(value).__name__!r} instead"
            )


class Bool(Field):
    def validate_value(self, value: bool):
        if not isinstance(value, bool):
            raise ValueError(
                f"Expected a value of type 'bool', "
                f"got {type(value).__name__!r} instead"
            )


class EnumField(Field):
    def __init__(
        self,
        py_enum: Type[enum.Enum],
        *,
        default: Optional[enum.Enum] = None,
        required: bool = False,
    ):
        super().__init__(default=default, required=required)
        self.py_enum = py_enum

    def validate_value(self, value):
        if isinstance(value, self.py_enum):
            return

        try:
            self.py_enum(value)
        except ValueError:
            raise ValueError(
                f'Expected one of {[x.value for x in self.py_enum]!r}, '
                f'got {value!r} instead'
            )

    def convert(self, value, path: str) -> enum.Enum:
        self.validate_value(value)
        return self.py_enum(value)


class Repeated(Field):
    def __init__(self, of: Field, *, min_length: int = 0, required: bool = False):
        super().__init__(default=None, required=required)
        self.field = of
        self.min_length = min_length

    def validate_value(self, values: Iterable):
        if isinstance(values, (str, bytes, Mapping)) or not isinstance(values, Iterable):
            raise ValueError(
                f"Repeated field {self.name!r} should be a 'list' or 'tuple', "
                f"got {type(values).__name__!r} instead"
            )

        values = list(values)

        if len(values) < self.min_length:
            raise ValueError(
                f'Expected at least {self.min_length} items, got {len(values)}'
            )

        for value in values:
            self.field.validate_value(value)

    def convert(self, values, path: str) -> list:
        if isinstance(values, (str, bytes, Mapping)) or not isinstance(values, Iterable):
            self.validate_value(values)

        values = list(values)

        if len(values) < self.min_length:
            raise ValueError(
                f'Expected at least {self.min_length} items, got {len(values)}'
            )

        return [
            _convert_field(self.field, value, f'{path}[{i}]')
            for i, value in enumerate(values)
        ]


class SectionField(Field):
    def __init__(self, section_type: Type['Section'], *, required: bool = False):
        super().__init__(default=None, required=required)
        self.section_type = section_type

    def validate_value(self, value):
        if not isinstance(value, self.section_type):
            raise ValueError(
                f'Expected a section of type {self.section_type.__name__!r}, '
                f'got {type(value).__name__!r} instead'
            )

    def convert(self, value, path: str) -> 'Section':
        if isinstance(value, self.section_type):
            return value

        if not isinstance(value, Mapping):
            raise ValueError(
                f'Expected a table, got {type(value).__name__!r} instead'
            )

        return self.section_type.from_dict(value, path=path)


class OneOf:
    def __init__(self, *args: str):
        self.fields: List[str] = list(args)

        # name of one_of is set in the section that contains it
        self.name: Optional[str] = None


one_of = OneOf


def _convert_field(field: Field, value, path: str):
    try:
        return field.convert(value, path)
    except ConfigValidationError:
        raise
    except ValueError as e:
        raise ConfigValidationError(str(e), path) from e


class FieldGetter:
    def __init__(self, key: str, default=None):
        self._key = key
        self._default = default

    def __call__(self, obj):
        return obj._data.get(self._key, self._default)


class FieldSetter:
    def __init__(self, key: str):
        self._key = key

    def __call__(self, obj, value):
        obj._field_by_name[self._key].validate_value(value)
        obj._data[self._key] = value


class OneOfSetter(FieldSetter):
    def __init__(self, key: str, group: OneOf):
        super().__init__(key)
        self._group = group

    def __call__(self, obj, value):
        obj._field_by_name[self._key].validate_value(value)

        for name in self._group.fields:
            obj._data.pop(name, None)

        obj._data[self._key] = value
        obj._which_one_of[self._group.name] = self._key


class SectionMeta(ABCMeta):
    def __new__(mcs, name, bases, namespace):
        new_cls = super().__new__(mcs, name, bases, namespace)

        if name != 'Section':
            new_cls._field_by_name = {}
            new_cls._required_fields = set()
            new_cls._one_of_by_field_name = mcs._collect_one_ofs(name, namespace)
            new_cls._one_ofs = {x.name for x in new_cls._one_of_by_field_name.values()}

            for key, field in mcs._collect_fields(name, namespace).items():
                mcs._add_field(new_cls, key, field)

        return new_cls

    @classmethod
    def _collect_one_ofs(mcs, class_name: str, class_dict: dict) -> Dict[str, OneOf]:
        one_ofs = {}

        for key, value in class_dict.items():
            if isinstance(value, OneOf):
                value.name = key

                if len(value.fields) < 1:
                    raise ConfigValidationError(
                        f'one_of {key!r} of section {class_name!r} should have at least one field'
                    )

                for field_name in value.fields:
                    one_ofs[field_name] = value

        return one_ofs

    @classmethod
    def _collect_fields(mcs, class_name: str, class_dict: dict) -> Dict[str, Field]:
        fields = {}

        for key, value in class_dict.items():
            if isinstance(value, Field):
                value.name = key

                if value.default is not None:
                    try:
                        value.validate_value(value.default)
                    except ValueError:
                        raise ConfigValidationError(
                            f'Field {key!r} of section {class_name!r} has invalid default value: {value.default!r}'
                        )

                fields[key] = value

        return fields

    @staticmethod
    def _add_field(section_type, name: str, field: Field):
        if name in section_type._one_of_by_field_name:
            if field.required:
                raise ConfigValidationError(
                    f'A one_of field {section_type.__name__}.{name} should be optional, not required!'
                )

            setter = OneOfSetter(name, section_type._one_of_by_field_name[name])
        else:
            setter = FieldSetter(name)

        if field.required and field.default is None:
            section_type._required_fields.add(name)

        section_type._field_by_name[name] = field
        setattr(section_type, name, property(FieldGetter(name, field.default), setter))


S = TypeVar('S', bound='Section')


class Section(metaclass=SectionMeta):
    # The following fields provided by metaclass
    _field_by_name: Dict[str, Field] = None
    _one_of_by_field_name: Dict[str, OneOf] = None
    _one_ofs: Set[str] = None
    _required_fields: Set[str] = None

    def __init__(self, **kwargs):
        """
        :raises:
            AttributeError: when section has no such field
            ValueError: when field value is invalid
        """
        self._data = {}
        self._which_one_of = {}

        for key, value in kwargs.items():
            if key not in self._field_by_name:
                raise AttributeError(
                    f'Section {type(self).__qualname__} has no {key!r} field'
                )
            if value is not None:
                setattr(self, key, value)

    @classmethod
    def from_dict(cls: Type[S], data: Mapping[str, Any], *, path: str = '') -> S:
        """
        Builds a validated section from parsed config data

        :raises:
            ConfigValidationError: with the dotted path of the offending field
        """
        values = {}
        prefix = f'{path}.' if path else ''

        for key, raw in data.items():
            if key not in cls._field_by_name:
                raise ConfigValidationError(
                    f'Unknown field, expected one of {sorted(cls._field_by_name)}',
                    f'{prefix}{key}',
                )

            values[key] = _convert_field(cls._field_by_name[key], raw, f'{prefix}{key}')

        for group in {id(x): x for x in cls._one_of_by_field_name.values()}.values():
            present = [x for x in group.fields if x in values]

            if len(present) > 1:
                raise ConfigValidationError(
                    f'Only one of {group.fields} can be set, got {present}',
                    f'{prefix}{group.name}',
                )

        missing = sorted(cls._required_fields - values.keys())

        if missing:
            raise ConfigValidationError('Missing required field', f'{prefix}{missing[0]}')

        return cls(**values)

    def has_field(self, name: str) -> bool:
        """
        Checks if field was explicitly set

        :raises:
            AttributeError: if section has no such field
        """
        if name not in self._field_by_name:
            raise AttributeError(
                f'Section {type(self).__qualname__} has no such field {name!r}'
            )

        return name in self._data

    def which_one_of(self, one_of_name: str) -> Optional[str]:
        if one_of_name not in self._one_ofs:
            raise ValueError(
                f'Section {type(self).__qualname__} has no such one_of {one_of_name!r}'
            )

        return self._which_one_of.get(one_of_name)

    @classmethod
    def list_fields(cls) -> List[str]:
        return list(cls._field_by_name.keys())

    def to_dict(self) -> dict:
        return {key: self._to_dict(value) for key, value in self._data.items()}

    def _to_dict(self, value):
        if isinstance(value, Section):
            return value.to_dict()

        if isinstance(value, enum.Enum):
            return value.value

        if isinstance(value, Sequence) and not isinstance(value, str):
            return [self._to_dict(x) for x in value]

        return value
