from marshmallow import (
    RAISE,
    Schema,
    ValidationError,
    fields,
    post_load,
    validate,
    validates_schema,
)

from .models import SimConfig


class IntList(fields.Field):
    """Comma separated integers, e.g. ``2, 11``."""

    def _deserialize(self, value, attr, data, **kwargs):
        if isinstance(value, (list, tuple)):
            items = value
        else:
            items = [v for v in str(value).split(',') if v.strip()]
        try:
            return tuple(int(v) for v in items)
        except ValueError as error:
            raise ValidationError(
                'expected comma separated integers'
            ) from error

    def _serialize(self, value, attr, obj, **kwargs):
        if value is None:
            return None
        return ','.join(str(v) for v in value)


class SimConfigSchema(Schema):
    """Keys of a simulation config file. Missing keys keep their default."""

    class Meta:
        unknown = RAISE

    mu = fields.Int(validate=validate.Range(min=0, max=6))
    n_fft = fields.Int(validate=validate.Range(min=16))
    bandwidth_hz = fields.Float(
        validate=validate.Range(min=0, min_inclusive=False)
    )
    n_prb = fields.Int(validate=validate.Range(min=1))
    n_layers = fields.Int(validate=validate.OneOf([1, 2]))
    n_rx = fields.Int(validate=validate.Range(min=1))
    first_symbol = fields.Int(validate=validate.Range(min=0, max=13))
    n_symbols = fields.Int(validate=validate.Range(min=1, max=14))
    dmrs_symbols = IntList()
    dmrs_spacing = fields.Int(validate=validate.OneOf([2, 3]))
    scrambling_id = fields.Int(validate=validate.Range(min=0, max=1023))
    slot_number = fields.Int(validate=validate.Range(min=0))
    mcs_index = fields.Int()
    tbs = fields.Int(allow_none=True, validate=validate.Range(min=1))
    filter_taps = fields.Int(validate=validate.Range(min=3))
    tx_filter = fields.Bool()
    channel = fields.Str()
    doppler_hz = fields.Float(validate=validate.Range(min=0))
    cfo_hz = fields.Float()
    sto_samples = fields.Int()
    snr_start_db = fields.Float()
    snr_stop_db = fields.Float()
    snr_step_db = fields.Float(
        validate=validate.Range(min=0, min_inclusive=False)
    )
    trials = fields.Int(validate=validate.Range(min=1))
    max_block_errors = fields.Int(validate=validate.Range(min=1))
    seed = fields.Int(validate=validate.Range(min=0))
    max_iters = fields.Int(validate=validate.Range(min=1))
    decoder_mode = fields.Str(validate=validate.OneOf(['exact', 'two_piece']))
    estimator = fields.Str(validate=validate.OneOf(['LS', 'MMSE']))
    genie = fields.Bool()
    sync = fields.Bool()
    record_timing = fields.Bool()

    @validates_schema
    def validate_sweep(self, data, **kwargs):
        start = data.get('snr_start_db', SimConfig.snr_start_db)
        stop = data.get('snr_stop_db', SimConfig.snr_stop_db)
        if stop < start:
            raise ValidationError(
                'must not be below snr_start_db', 'snr_stop_db'
            )

    @post_load
    def make_config(self, data, **kwargs):
        return SimConfig(**data)


class ReportRowSchema(Schema):
    """One CSV row of a sweep report; column order is the field order."""

    class Meta:
        ordered = True

    snr_db = fields.Float()
    blocks = fields.Int()
    block_errors = fields.Int()
    bler = fields.Float()
    ber_pre = fields.Float()
    ber_post = fields.Float()
    evm_pct = fields.Float()
    mean_iters = fields.Float()
    elapsed_s = fields.Float()


class IqHeaderSchema(Schema):
    class Meta:
        ordered = True

    format_version = fields.Int()
    sample_rate = fields.Float()
    delay = fields.Int()
    n_samples = fields.Int()
    sample_format = fields.Str()
    files = fields.List(fields.Str())
