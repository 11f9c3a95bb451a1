import os

import pandas as pd

from gfcnn import gfarch
from gfcnn import gfcli
from gfcnn import gfdata


tiny = 'C(2)-P(2)-G(3)-F(8)*'
small_synth = ['--n', '8', '--w', '8', '--classes', '2', '--runs', '2',
               '--samples', '64', '--structure-seed', '3']


def read_bytes(path):
    with open(path, 'rb') as f:
        return f.read()


def make_image_set(tmp_path, name='train', seed='0'):
    csv = str(tmp_path / (name + '.csv'))
    out = str(tmp_path / (name + '.gfim'))
    assert gfcli.main(['synth', csv, '--seed', seed] + small_synth) == 0
    assert gfcli.main(['convert', csv, out, '--window', '8']) == 0
    return out


def test_params_reference_models(capsys):
    assert gfcli.main(['params', '--model', '3']) == 0
    out = capsys.readouterr().out
    assert 'parameters 1,292,336' in out
    assert 'flatten' in out
    assert gfcli.main(['params', '--model', '6', '--global']) == 0
    out = capsys.readouterr().out
    assert 'parameters 3,344,322' in out
    assert 'concat' in out
    assert gfcli.main(['params', '--model', '2', '--global']) == 0
    out = capsys.readouterr().out
    assert '+13,010' in out
    assert ' < ' in out


def test_params_arch_string(capsys):
    assert gfcli.main(['params', tiny, '--input-shape', '8', '8',
                       '--classes', '3']) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].split() == ['input', '(8,', '8,', '1)']
    count = gfarch.spec_params(gfarch.parse_arch(tiny, (8, 8), 3))
    assert 'parameters {:,}'.format(count.total) in out


def test_bad_arch(capsys):
    assert gfcli.main(['params', 'C(16)-X(2)']) == 1
    err = capsys.readouterr().err
    assert err.startswith('gfcnn params: error:')
    assert 'token 2' in err
    assert gfcli.main(['params', 'C(16)-F(10)', '--model', '1']) == 1
    assert gfcli.main(['params', '--model', '9']) == 1


def test_train_checks_arch_before_data(tmp_path, capsys):
    missing = str(tmp_path / 'missing.gfim')
    assert gfcli.main(['train', missing, 'C(4)-F(2)-C(4)',
                       '--out', str(tmp_path / 'm')]) == 1
    assert 'token 3' in capsys.readouterr().err


def test_synth_is_deterministic(tmp_path):
    a = str(tmp_path / 'a.csv')
    b = str(tmp_path / 'b.csv')
    c = str(tmp_path / 'c.csv')
    assert gfcli.main(['synth', a, '--seed', '5'] + small_synth) == 0
    assert gfcli.main(['synth', b, '--seed', '5'] + small_synth) == 0
    assert gfcli.main(['synth', c, '--seed', '6'] + small_synth) == 0
    assert read_bytes(a) == read_bytes(b)
    assert read_bytes(a) != read_bytes(c)
    frame = pd.read_csv(a)
    assert list(frame.columns[:3]) == ['fault', 'run', 'x1']
    assert len(frame) == 2 * 2 * 64


def test_convert(tmp_path):
    out = make_image_set(tmp_path)
    dataset = gfdata.load_images(out)
    assert len(dataset) == 2 * 2 * 8
    assert (dataset.n, dataset.w, dataset.n_classes) == (8, 8, 2)
    assert os.path.exists(str(tmp_path / 'train.gfim.stats.csv'))
    assert os.path.exists(out + '.txt')


def test_convert_with_train_stats(tmp_path):
    make_image_set(tmp_path)
    csv = str(tmp_path / 'test.csv')
    out = str(tmp_path / 'test.gfim')
    assert gfcli.main(['synth', csv, '--seed', '1'] + small_synth) == 0
    assert gfcli.main(['convert', csv, out, '--window', '8', '--stats',
                       str(tmp_path / 'train.gfim.stats.csv')]) == 0
    assert not os.path.exists(out + '.stats.csv')
    assert len(gfdata.load_images(out)) == 32


def test_train_and_eval(tmp_path, capsys):
    train = make_image_set(tmp_path)
    test = make_image_set(tmp_path, 'test', '1')
    capsys.readouterr()
    runs = []
    for name in ('a', 'b'):
        os.mkdir(str(tmp_path / name))
        model = str(tmp_path / name / 'model')
        history = str(tmp_path / name / 'history.csv')
        assert gfcli.main(['train', train, tiny, '--out', model, '--history',
                           history, '--epochs', '2', '--batch-size', '8',
                           '--eval', test]) == 0
        runs.append((model, history))
    out = capsys.readouterr().out
    assert out.startswith('seed 0: final loss')
    assert 'macro FDR' in out
    (model_a, history_a), (model_b, history_b) = runs
    assert read_bytes(model_a) == read_bytes(model_b)
    assert read_bytes(model_a + '.bin') == read_bytes(model_b + '.bin')
    assert read_bytes(history_a) == read_bytes(history_b)
    assert len(pd.read_csv(history_a)) == 2
    manifest = read_bytes(model_a).decode()
    assert 'train.epochs 2' in manifest
    assert 'train.images_sha256 %s' % gfdata.images_digest(train) in manifest

    report = str(tmp_path / 'report.txt')
    assert gfcli.main(['eval', model_a, test, '--report', report]) == 0
    out = capsys.readouterr().out
    assert out.startswith('macro FDR ')
    with open(report) as f:
        text = f.read()
    assert 'images 32' in text
    assert 'arch %s' % tiny in text


def test_train_repeat(tmp_path, capsys):
    train = make_image_set(tmp_path)
    capsys.readouterr()
    model = str(tmp_path / 'model')
    assert gfcli.main(['train', train, tiny, '--out', model, '--epochs', '1',
                       '--repeat', '2', '--seed', '4', '--eval', train]) == 0
    out = capsys.readouterr().out
    assert 'seed 4:' in out
    assert 'seed 5:' in out
    assert 'over 2 runs' in out
    assert gfarch.load_model(model + '.seed5').seed == 5


def test_eval_class_mismatch(tmp_path, capsys):
    train = make_image_set(tmp_path)
    model = str(tmp_path / 'model')
    assert gfcli.main(['train', train, tiny, '--out', model,
                       '--epochs', '1']) == 0
    csv = str(tmp_path / 'three.csv')
    three = str(tmp_path / 'three.gfim')
    options = list(small_synth)
    options[options.index('--classes') + 1] = '3'
    assert gfcli.main(['synth', csv] + options) == 0
    assert gfcli.main(['convert', csv, three, '--window', '8']) == 0
    capsys.readouterr()
    assert gfcli.main(['eval', model, three]) == 1
    assert 'classes' in capsys.readouterr().err


if __name__ == "__main__":
    import pathlib
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        test_convert(pathlib.Path(d))
