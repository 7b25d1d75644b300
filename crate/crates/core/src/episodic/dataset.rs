use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassImages {
    pub name: String,
    /// `[channels, height, width]` arrays with values in `[0, 1]`.
    pub images: Vec<Array>,
}

/// Images of one split, grouped by class.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotDataset {
    pub split: Split,
    pub classes: Vec<ClassImages>,
    /// `[channels, height, width]`
    pub image_shape: [usize; 3],
}

impl FewShotDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn image(&self, class: usize, index: usize) -> &Array {
        &self.classes[class].images[index]
    }

    /// Every class must hold at least `per_class` images.
    pub fn check_capacity(&self, per_class: usize) -> Result<()> {
        for c in &self.classes {
            if c.images.len() < per_class {
                return Err(Error::InsufficientImages {
                    class: c.name.clone(),
                    available: c.images.len(),
                    required: per_class,
                });
            }
        }
        Ok(())
    }

    /// Stacks the listed `(class, image)` pairs into `[B, C, H, W]`.
    pub fn stack(&self, items: &[(usize, usize)]) -> Result<Array> {
        let refs: Vec<&Array> = items.iter().map(|&(c, i)| self.image(c, i)).collect();
        Array::stack(&refs)
    }

    /// All images with their class index as label, in class order.
    pub fn all_images(&self) -> Result<(Array, Vec<usize>)> {
        let mut items = Vec::new();
        for (c, class) in self.classes.iter().enumerate() {
            items.extend((0..class.images.len()).map(|i| (c, i)));
        }
        if items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let labels = items.iter().map(|&(c, _)| c).collect();
        Ok((self.stack(&items)?, labels))
    }
}

/// Key-value description of a dataset directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";
const FORMAT_TAG: &str = "crnet-dataset-v1";

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("manifest is missing `{key}`")))
    }

    pub fn parse_key<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("manifest `{key}`: cannot parse `{raw}`")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line {}: `{line}`", n + 1)))?;
            m.entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(m)
    }

    /// Class names listed for `split`, in order.
    pub fn classes(&self, split: Split) -> Result<Vec<String>> {
        let raw = self.get(&format!("split.{}", split.name()))?;
        Ok(raw
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect())
    }
}

/// The three class-disjoint splits of a dataset plus its manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub train: FewShotDataset,
    pub val: FewShotDataset,
    pub test: FewShotDataset,
    pub manifest: Manifest,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &FewShotDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Writes `root/manifest.txt` and `root/<split>/<class>/<index>.png`.
    pub fn save(&self, root: &Path) -> Result<()> {
        let mut manifest = self.manifest.clone();
        manifest.set("format", FORMAT_TAG);
        let [c, h, w] = self.train.image_shape;
        manifest.set("channels", c);
        manifest.set("image_height", h);
        manifest.set("image_width", w);
        for split in Split::ALL {
            let ds = self.split(split);
            let names: Vec<&str> = ds.classes.iter().map(|c| c.name.as_str()).collect();
            manifest.set(&format!("split.{}", split.name()), names.join(","));
            for class in &ds.classes {
                let dir = root.join(split.name()).join(&class.name);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (i, img) in class.images.iter().enumerate() {
                    write_png(&dir.join(format!("{i:04}.png")), img)?;
                }
            }
        }
        let path = root.join(MANIFEST_FILE);
        fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = Manifest::parse(&text)?;
        if manifest.get("format")? != FORMAT_TAG {
            return Err(Error::Format(format!(
                "unsupported dataset format `{}`",
                manifest.get("format")?
            )));
        }
        let shape = [
            manifest.parse_key("channels")?,
            manifest.parse_key("image_height")?,
            manifest.parse_key("image_width")?,
        ];
        let load_split = |split: Split| -> Result<FewShotDataset> {
            let mut classes = Vec::new();
            for name in manifest.classes(split)? {
                let dir = root.join(split.name()).join(&name);
                let mut files: Vec<_> = fs::read_dir(&dir)
                    .map_err(|e| Error::io(&dir, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "png"))
                    .collect();
                files.sort();
                let images = files
                    .iter()
                    .map(|f| read_png(f, shape))
                    .collect::<Result<Vec<_>>>()?;
                classes.push(ClassImages { name, images });
            }
            Ok(FewShotDataset {
                split,
                classes,
                image_shape: shape,
            })
        };
        Ok(DatasetBundle {
            train: load_split(Split::Train)?,
            val: load_split(Split::Val)?,
            test: load_split(Split::Test)?,
            manifest,
        })
    }
}

/// Maps `[0, 1]` to the nearest 8-bit level.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, img: &Array) -> Result<()> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "PNG export supports 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push(quantize(img.data()[(ch * h + y) * w + x]));
            }
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .finish()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn read_png(path: &Path, shape: [usize; 3]) -> Result<Array> {
    let fmt = |e: &dyn std::fmt::Display| Error::Format(format!("{}: {e}", path.display()));
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| fmt(&e))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| fmt(&"image too large"))?
    ];
    let info = reader.next_frame(&mut buf).map_err(|e| fmt(&e))?;
    let c = match (info.color_type, info.bit_depth) {
        (png::ColorType::Grayscale, png::BitDepth::Eight) => 1,
        (png::ColorType::Rgb, png::BitDepth::Eight) => 3,
        other => return Err(fmt(&format!("unsupported PNG layout {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    if [c, h, w] != shape {
        return Err(fmt(&format!(
            "image is {c}x{h}x{w}, manifest says {shape:?}"
        )));
    }
    let mut data = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = buf[(y * w + x) * c + ch] as f64 / 255.0;
            }
        }
    }
    Array::new(&[c, h, w], data)
}

/// Writes CSV rows after `#`-prefixed `key=value` metadata lines.
pub fn write_csv(
    path: &Path,
    metadata: &[(String, String)],
    header: &str,
    rows: impl IntoIterator<Item = String>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let go = || -> std::io::Result<()> {
        for (k, v) in metadata {
            writeln!(w, "# {k}={v}")?;
        }
        writeln!(w, "{header}")?;
        for r in rows {
            writeln!(w, "{r}")?;
        }
        w.flush()
    };
    go().map_err(|e| Error::io(path, e))
}
