// Minimal end-to-end use of the library, no file I/O: synthesize phantoms,
// train a small network on random subvolumes, stitch a held-out volume, and
// print per-class scores. Mirrors what the CLI does with on-disk artifacts.

#include <cstdio>
#include <vector>

#include "voxseg/metrics.hpp"
#include "voxseg/model.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/sampler.hpp"
#include "voxseg/stitcher.hpp"
#include "voxseg/trainer.hpp"

using namespace voxseg;

int main() {
    PhantomSpec pspec;
    pspec.dims = {32, 32, 32};
    pspec.count = 3;  // two for training, one held out
    pspec.seed = 2024;

    std::vector<Volume> images;
    std::vector<LabelVolume> labels;
    for (int i = 0; i < pspec.count; ++i) {
        Phantom ph = generate_phantom(pspec, i);
        images.push_back(std::move(ph.image));
        labels.push_back(std::move(ph.noisy));
    }
    Volume held_out = std::move(images.back());
    LabelVolume truth = std::move(labels.back());
    images.pop_back();
    labels.pop_back();

    ModelSpec spec = build_model("meshnet-32", 1, kPhantomClasses, 0.1);
    ModelParams params = init_params<float>(spec, 7);
    std::printf("%s: %zu parameters, receptive field %d\n", spec.name.c_str(),
                parameter_count(spec), receptive_field(spec));

    TrainConfig tc;
    tc.steps = 60;
    tc.batch_size = 4;
    tc.side = 16;
    tc.seed = 7;
    tc.log_every = 20;
    const TrainReport report = train(spec, params, images, labels, tc, &std::cout);
    std::printf("loss %.4f -> %.4f\n", report.losses.front(), report.losses.back());

    SamplerConfig sc;
    sc.side = tc.side;
    sc.seed = 99;
    const CoveragePlan plan = plan_inference(held_out.dims(), sc, 32);
    const LabelVolume pred =
        segment_volume(spec, params, held_out, plan, tc.normalization);

    std::fputs(format_report(evaluate_segmentation(pred, truth)).c_str(), stdout);
    return 0;
}
