// Attach externally trained weights through a tensor archive and a name
// map.

use fmdacl::archive::{import_weights, parse_name_map, TensorArchive};
use fmdacl::nn::{BackboneKind, BackboneSpec, Network};
use fmdacl::tensor::Tensor;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut net = Network::build(BackboneSpec::new(BackboneKind::ConvUnet, 8, 2), 0)?;
    let head = net.params().find("cls_head.bias").expect("head bias");
    let k = net.params().get(head).len();

    // an archive as another framework might export it
    let mut external = TensorArchive::new();
    external.insert("classifier.b", Tensor::full(&[k], 0.25))?;
    let tmp = tempfile::tempdir()?;
    let path = tmp.path().join("pretrained.bin");
    external.save(&path)?;

    let map = parse_name_map("# external internal\nclassifier.b cls_head.bias\n")?;
    let n = import_weights(net.params_mut(), &TensorArchive::load(&path)?, &map)?;
    println!("imported {n} tensor(s); cls_head.bias = {:?}", net.params().get(head).data());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
