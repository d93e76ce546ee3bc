use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use partgrid::kittio::{labels_to_ground_truths, read_calib, read_label, read_velodyne, Scene};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Failure, SceneArgs};

fn is_stdin(p: &Path) -> bool {
    p.as_os_str() == "-"
}

/// Fails with an input error unless every path exists (`-` is stdin).
pub fn require_paths<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<(), Failure> {
    for p in paths {
        if !is_stdin(p) && !p.exists() {
            return Err(Failure::input(format!("{}: no such file", p.display())));
        }
    }
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    if is_stdin(path) {
        std::io::stdin().read_to_end(&mut buf)?;
    } else {
        buf = fs::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    }
    Ok(buf)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

pub fn write_bytes(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(p) if !is_stdin(p) => {
            fs::write(p, bytes).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
        }
        _ => {
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(bytes).and_then(|()| stdout.flush()) {
                // reader went away (`| head`); nothing left to deliver
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                r => r?,
            }
        }
    }
    Ok(())
}

pub fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| Failure::invariant(e.to_string()))?;
    text.push(b'\n');
    write_bytes(out, &text)
}

/// `<path>.json`, the sidecar written next to binary outputs.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn require_out(out: Option<&Path>, what: &str) -> Result<PathBuf, Failure> {
    match out {
        Some(p) if !is_stdin(p) => Ok(p.to_path_buf()),
        _ => Err(Failure::input(format!("{what} needs --out <path> (binary output plus a JSON header)"))),
    }
}

pub fn load_scene(args: &SceneArgs) -> Result<Scene, Failure> {
    if let Some(v) = &args.velodyne {
        let calib = args.calib.as_ref().expect("clap enforces --calib");
        let mut inputs = vec![v, calib];
        inputs.extend(&args.label);
        require_paths(inputs)?;
        let points = read_velodyne(v)?.into_iter().map(|p| p.pos).collect();
        let mut scene = Scene { points, ..Default::default() };
        if let Some(label) = &args.label {
            let gts = labels_to_ground_truths(&read_label(label)?, &read_calib(calib)?)?;
            scene.boxes = gts.iter().map(|g| g.bbox).collect();
            scene.classes = gts.into_iter().map(|g| g.class).collect();
        }
        return Ok(scene);
    }
    let path = args.scene.clone().unwrap_or_else(|| PathBuf::from("-"));
    require_paths([&path])?;
    let scene: Scene = read_json(&path)?;
    if scene.boxes.len() != scene.classes.len() {
        return Err(Failure::input(format!(
            "{}: {} boxes but {} classes",
            path.display(),
            scene.boxes.len(),
            scene.classes.len()
        )));
    }
    Ok(scene)
}
