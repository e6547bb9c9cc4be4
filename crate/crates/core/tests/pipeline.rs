mod common;

use std::fs;
use std::path::Path;

use clipforge::data::{load_dataset, load_split, Vocabulary, MANIFEST_FILE, SPLIT_FILE, VOCAB_FILE};
use clipforge::model::{Checkpoint, DualEncoderModel};
use clipforge::run::{cmd_datagen, DatagenOptions};
use clipforge::Error;
use common::{make_dataset, micro_config};

#[test]
fn datagen_output_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let s = cmd_datagen(&DatagenOptions {
        output: out.clone(),
        images: 300,
        languages: 4,
        image_size: 8,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(s.generated, 300);
    assert_eq!(s.kept + s.dropped, 300);
    assert_eq!(s.train + s.validation, s.kept);
    assert_eq!(s.validation, (0.15 * s.kept as f64).round() as usize);

    let ds = load_dataset(&out).unwrap();
    assert_eq!(ds.len(), s.kept);
    assert_eq!(ds.languages().len(), 4);
    assert!(ds.records().iter().all(|r| r.aesthetic_score > 4.5));
    assert_eq!(ds.image_side().unwrap(), 8);
    let (train, val) = load_split(&out.join(SPLIT_FILE)).unwrap();
    assert_eq!((train.len(), val.len()), (s.train, s.validation));
    assert_eq!(Vocabulary::load(&out.join(VOCAB_FILE)).unwrap(), Vocabulary::from_dataset(&ds));
}

#[test]
fn datagen_is_deterministic_and_refuses_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    make_dataset(&a, 120, 3, 8, 9);
    make_dataset(&b, 120, 3, 8, 9);
    for f in [MANIFEST_FILE, SPLIT_FILE, VOCAB_FILE, "cipher.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let mut pixels: Vec<_> = fs::read_dir(a.join("pixels")).unwrap().map(|e| e.unwrap().file_name()).collect();
    pixels.sort();
    assert!(!pixels.is_empty());
    for p in &pixels {
        assert_eq!(fs::read(a.join("pixels").join(p)).unwrap(), fs::read(b.join("pixels").join(p)).unwrap());
    }
    let opts = DatagenOptions {
        output: a.clone(),
        images: 50,
        languages: 3,
        image_size: 8,
        ..Default::default()
    };
    assert!(matches!(cmd_datagen(&opts), Err(Error::Refused(_))));
    let s = cmd_datagen(&DatagenOptions { force: true, ..opts }).unwrap();
    assert_eq!(load_dataset(&a).unwrap().len(), s.kept);
}

#[test]
fn loader_rejects_incomplete_records() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    make_dataset(&d, 60, 3, 4, 2);
    let manifest = fs::read_to_string(d.join(MANIFEST_FILE)).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();

    let edit = |f: &dyn Fn(&str) -> String| {
        let mut out = lines[0].to_string() + "\n";
        out += &f(lines[1]);
        out += "\n";
        for l in &lines[2..] {
            out += l;
            out += "\n";
        }
        fs::write(d.join(MANIFEST_FILE), out).unwrap();
        load_dataset(&d)
    };
    // empty caption
    let r = edit(&|l| {
        let mut f: Vec<&str> = l.split('\t').collect();
        f[4] = "";
        f.join("\t")
    });
    assert!(matches!(r, Err(Error::Format(ref m)) if m.contains("missing")), "{r:?}");
    // whitespace-only caption
    let r = edit(&|l| {
        let mut f: Vec<&str> = l.split('\t').collect();
        f[5] = "   ";
        f.join("\t")
    });
    assert!(matches!(r, Err(Error::Format(_))), "{r:?}");
    // last language column dropped
    let r = edit(&|l| l.rsplit_once('\t').unwrap().0.to_string());
    assert!(matches!(r, Err(Error::Format(ref m)) if m.contains("fields")), "{r:?}");
    // restored file loads again
    fs::write(d.join(MANIFEST_FILE), &manifest).unwrap();
    assert_eq!(load_dataset(&d).unwrap().len(), lines.len() - 1);
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let m = DualEncoderModel::new(micro_config(), 4).unwrap();
    let ck = Checkpoint::from_model(&m);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    let m2 = back.to_model().unwrap();
    for ((na, a), (nb, b)) in m.named_params().zip(m2.named_params()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    ck.save(&p).unwrap();
    assert_eq!(fs::read(&p).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&p).unwrap(), ck);
}

#[test]
fn checkpoint_corruption_is_detected() {
    let bytes = Checkpoint::from_model(&DualEncoderModel::new(micro_config(), 4).unwrap()).to_bytes();
    let mut flipped = bytes.clone();
    let i = bytes.len() - 40;
    flipped[i] ^= 0x10;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Integrity(_))));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Format(_))));
}

#[test]
fn bundled_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let toy = clipforge::run::RunConfig::from_file(&dir.join("toy.txt")).unwrap();
    assert_eq!(toy, clipforge::run::RunConfig::default());
    let s2 = clipforge::run::RunConfig::from_file(&dir.join("stage2-text-encoder.txt")).unwrap();
    assert_eq!(s2.regime, clipforge::model::FreezeRegime::TextEncoder);
    assert!(s2.init_checkpoint.is_some());
    s2.validate().unwrap();
}
